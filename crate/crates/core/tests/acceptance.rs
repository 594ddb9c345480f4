//! The release gate. Each test checks one advertised guarantee end to end
//! and prints a single PASS line with the measured numbers; tolerances are
//! stated inline. The heavyweight fixtures (a field trained for 20k
//! iterations, bundles embedded at three plane depths) are built once and
//! shared, so run this target with its tests in order:
//!
//! ```text
//! cargo test --test acceptance -- --test-threads 1 --nocapture
//! ```

mod common;

use std::sync::OnceLock;
use std::time::Instant;

use common::{max_gradient_error, primitive_cases};
use nerfstego::codec::{decoding_accuracy, rs_bpp, BitPlanes, ReedSolomon};
use nerfstego::container::{load_bundle, load_key, save_bundle, save_key};
use nerfstego::dataset::{generate_training_views, SceneSpec, GROUND_TRUTH_SAMPLES};
use nerfstego::field::{train_field, FieldConfig, FieldTraining, TrainOptions};
use nerfstego::img::psnr;
use nerfstego::pipeline::{
    attacker_sweep, default_sweep_offsets, embed, extract_message, extract_planes,
    off_key_offsets, EmbedOptions, EmbedReport, StegoBundle, SweepAxis,
};
use nerfstego::render::{
    camera_rays, render_image, render_ray, FieldEval, JitterPolicy, Ray, RenderOptions, ViewKey,
};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(criterion: &str, pass: bool, details: &str) {
    println!(
        "criterion {criterion}: {} ({details})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {details}");
}

/// The secret viewpoint every embedding below hides behind.
fn secret_key() -> ViewKey {
    ViewKey::with_defaults(30.0, -30.0, 64, 64)
}

/// Deterministic payload that exactly fills one 64x64 bit plane after the
/// 32-bit frame header.
fn full_plane_message(planes: usize, seed: u64) -> Vec<u8> {
    let mut bytes = vec![0u8; (planes * 64 * 64 - 32) / 8];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut bytes);
    bytes
}

fn field_fixture() -> &'static FieldTraining {
    static FIELD: OnceLock<Result<FieldTraining, String>> = OnceLock::new();
    FIELD
        .get_or_init(|| {
            let scene = SceneSpec::three_spheres();
            let key = secret_key();
            let views =
                generate_training_views(&scene, 20, 64, 64, key.radius, key.focal_px, 7)
                    .map_err(|e| e.to_string())?;
            let config = FieldConfig {
                width: 32,
                depth: 2,
                ..FieldConfig::default()
            };
            let opts = TrainOptions {
                iters: 20_000,
                batch_rays: 256,
                lr: 5e-4,
                seed: 0,
                n_coarse: 32,
                n_fine: 32,
                ..TrainOptions::default()
            };
            let started = Instant::now();
            let trained = train_field(&views, &config, &opts).map_err(|e| e.to_string())?;
            println!(
                "[fixture] field: 20 views, 20k iterations, {:.0} s",
                started.elapsed().as_secs_f64()
            );
            Ok(trained)
        })
        .as_ref()
        .expect("field fixture")
}

fn embed_fixture() -> &'static Vec<(StegoBundle, EmbedReport)> {
    static EMBEDS: OnceLock<Result<Vec<(StegoBundle, EmbedReport)>, String>> = OnceLock::new();
    EMBEDS
        .get_or_init(|| {
            let field = &field_fixture().params;
            let key = secret_key();
            let message = full_plane_message(1, 2024);
            let opts = EmbedOptions {
                max_epochs: 2000,
                ..EmbedOptions::default()
            };
            let mut out = Vec::new();
            for d in 1..=3usize {
                let (bundle, rep) =
                    embed(field, &key, &message, d, &opts).map_err(|e| e.to_string())?;
                println!(
                    "[fixture] embed depth {d}: exact at epoch {} ({:.1} s)",
                    rep.epochs_to_100, rep.wall_time_s
                );
                out.push((bundle, rep));
            }
            Ok(out)
        })
        .as_ref()
        .expect("embed fixture")
}

#[test]
fn c01_gradients_match_finite_differences() {
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_name = "";
    for seed in 0..20u64 {
        for case in primitive_cases(seed) {
            let err = max_gradient_error(&case);
            if err > worst {
                worst = err;
                worst_name = case.name;
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    report(
        "01 autodiff-gradcheck",
        worst < 1e-5 && elapsed < 60.0,
        &format!("20 seeds, worst rel err {worst:.2e} ({worst_name}), {elapsed:.1} s"),
    );
}

/// Constant density and color between two fixed depths, empty elsewhere.
struct Slab {
    z0: f64,
    z1: f64,
    sigma: f64,
    rgb: [f64; 3],
}

impl FieldEval for Slab {
    fn eval_batch(&self, positions: &[f64], _dirs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = positions.len() / 3;
        let mut rgb = Vec::with_capacity(3 * n);
        let mut sigma = Vec::with_capacity(n);
        for i in 0..n {
            let z = positions[3 * i + 2];
            let inside = z >= self.z0 && z <= self.z1;
            rgb.extend_from_slice(&self.rgb);
            sigma.push(if inside { self.sigma } else { 0.0 });
        }
        (rgb, sigma)
    }
}

/// Always white, density drawn per call batch from a hash of position; rgb=1
/// against a white background turns the rendered color into the weight sum
/// plus the background coefficient.
struct WhiteNoiseDensity;

impl FieldEval for WhiteNoiseDensity {
    fn eval_batch(&self, positions: &[f64], _dirs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = positions.len() / 3;
        let mut rgb = Vec::with_capacity(3 * n);
        let mut sigma = Vec::with_capacity(n);
        for i in 0..n {
            let p = &positions[3 * i..3 * i + 3];
            let h = p
                .iter()
                .fold(0u64, |acc, &v| acc.wrapping_mul(31).wrapping_add(v.to_bits()));
            rgb.extend_from_slice(&[1.0, 1.0, 1.0]);
            sigma.push((h % 1000) as f64 / 250.0);
        }
        (rgb, sigma)
    }
}

#[test]
fn c02_renderer_matches_closed_forms() {
    let ray = Ray {
        origin: [0.0, 0.0, 4.0],
        direction: [0.0, 0.0, -1.0],
        t_near: 2.0,
        t_far: 6.0,
    };
    let opts = RenderOptions {
        n_coarse: 256,
        n_fine: 0,
        background: [1.0, 1.0, 1.0],
        jitter: JitterPolicy::Midpoint,
    };

    // Constant-density slab along the ray, closed-form alpha compositing.
    let slab = Slab {
        z0: -0.7,
        z1: 0.9,
        sigma: 2.0,
        rgb: [0.3, 0.6, 0.2],
    };
    let render = render_ray(&slab, &slab, &ray, &opts, 0).unwrap();
    let trans = (-slab.sigma * (slab.z1 - slab.z0)).exp();
    let mut slab_err = (render.fine_residual - trans).abs();
    for c in 0..3 {
        let expected = slab.rgb[c] * (1.0 - trans) + opts.background[c] * trans;
        slab_err = slab_err.max((render.rgb_fine[c] - expected).abs());
    }

    // Zero density must reproduce the background exactly.
    let vacuum = Slab {
        z0: 0.0,
        z1: 0.0,
        sigma: 0.0,
        rgb: [0.0, 0.0, 0.0],
    };
    let empty = render_ray(&vacuum, &vacuum, &ray, &opts, 0).unwrap();
    let background_exact = empty.rgb_fine == opts.background;

    // Weights plus the leftover background coefficient always sum to one.
    // With rgb pinned to 1 on a white background both passes reduce to that
    // sum, and the coarse weights are exposed directly.
    let mut partition_err = 0.0f64;
    let key = secret_key();
    let noise = WhiteNoiseDensity;
    let jittered = RenderOptions {
        n_coarse: 37,
        n_fine: 23,
        background: [1.0, 1.0, 1.0],
        jitter: JitterPolicy::Seeded(5),
    };
    let rays = camera_rays(&key);
    for (i, ray) in rays.iter().step_by(211).enumerate() {
        let r = render_ray(&noise, &noise, ray, &jittered, i as u64).unwrap();
        let coarse: f64 = r.coarse_weights.iter().sum::<f64>() + r.coarse_residual;
        partition_err = partition_err.max((coarse - 1.0).abs());
        for c in 0..3 {
            partition_err = partition_err.max((r.rgb_fine[c] - 1.0).abs());
        }
    }

    report(
        "02 renderer-quadrature",
        slab_err < 1e-3 && background_exact && partition_err < 1e-5,
        &format!(
            "slab err {slab_err:.2e} @256 samples, empty-space exact: {background_exact}, partition err {partition_err:.2e}"
        ),
    );
}

#[test]
fn c03_rate_metric_reproduces_reference_pairs() {
    let pairs = [
        (1usize, 0.539129, 0.078256),
        (2, 0.552551, 0.210206),
        (4, 0.548108, 0.384868),
        (5, 0.564591, 0.645914),
        (6, 0.540326, 0.483915),
    ];
    let mut worst = 0.0f64;
    for &(d, acc, expected) in &pairs {
        let got = rs_bpp(d, 1.0 - acc);
        worst = worst.max((got - expected).abs());
    }
    report(
        "03 rate-metric-table",
        worst < 1e-5,
        &format!("5 reference (D, acc) pairs, worst abs err {worst:.2e}"),
    );
}

#[test]
fn c04_embedding_converges_at_desk_scale() {
    let embeds = embed_fixture();
    let key = secret_key();
    let message = full_plane_message(1, 2024);
    let mut pass = true;
    let mut details = String::new();
    for (d, (bundle, rep)) in embeds.iter().enumerate() {
        let d = d + 1;
        let recovered = extract_message(bundle, &key).unwrap();
        let exact = recovered == message;
        pass &= exact && rep.epochs_to_100 <= 2000 && rep.wall_time_s < 600.0;
        details.push_str(&format!(
            "D={d}: epoch {} in {:.0} s exact {exact}; ",
            rep.epochs_to_100, rep.wall_time_s
        ));
    }
    report("04 desk-embed-converges", pass, details.trim_end_matches("; "));
}

#[test]
fn c05_deeper_planes_cost_more_epochs() {
    let field = &field_fixture().params;
    let key = secret_key();
    let opts = EmbedOptions {
        max_epochs: 2000,
        ..EmbedOptions::default()
    };
    // Nested capacity-filling payloads: the depth-d message is a prefix of
    // one fixed random blob, so each deeper run extends the shallower one's
    // bit string instead of redrawing it. Matched payloads (and matched
    // trunk init per seed) make the per-depth comparison paired, which the
    // three-seed median could not otherwise resolve.
    let blob = full_plane_message(3, 3000);
    let mut medians = Vec::new();
    for d in 1..=3usize {
        let message = &blob[..(d * 64 * 64 - 32) / 8];
        let mut epochs = Vec::new();
        for seed in 0..3u64 {
            let (_, rep) = embed(
                field,
                &key,
                message,
                d,
                &EmbedOptions {
                    seed,
                    ..opts.clone()
                },
            )
            .unwrap_or_else(|e| panic!("depth {d} seed {seed}: {e}"));
            epochs.push(rep.epochs_to_100);
        }
        epochs.sort_unstable();
        medians.push(epochs[1]);
    }
    let pass = medians.windows(2).all(|w| w[0] <= w[1]);
    report(
        "05 capacity-epoch-trend",
        pass,
        &format!(
            "nested full-capacity payloads, 3 seeds each, median epochs D1/D2/D3 = {}/{}/{}",
            medians[0], medians[1], medians[2]
        ),
    );
}

#[test]
fn c06_far_off_key_views_read_as_coin_flips() {
    let (bundle, _) = &embed_fixture()[0];
    let key = secret_key();
    let truth = BitPlanes::from_message(&full_plane_message(1, 2024), 1, 64, 64).unwrap();
    let mut accs = Vec::new();
    for (dt, dp) in off_key_offsets() {
        let planes = extract_planes(bundle, &key.offset(dt, dp)).unwrap();
        accs.push(decoding_accuracy(truth.bits(), planes.bits()).unwrap());
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let max = accs.iter().cloned().fold(0.0, f64::max);
    report(
        "06 off-key-leakage",
        (0.40..=0.65).contains(&mean) && max < 0.9,
        &format!(
            "{} views >=5 degrees off: mean acc {mean:.4}, max acc {max:.4}",
            accs.len()
        ),
    );
}

#[test]
fn c07_extraction_collapses_within_a_degree() {
    let (bundle, _) = &embed_fixture()[0];
    let key = secret_key();
    let truth = BitPlanes::from_message(&full_plane_message(1, 2024), 1, 64, 64).unwrap();
    let offsets = default_sweep_offsets();
    let mut pass = true;
    let mut details = String::new();
    for axis in [SweepAxis::Theta, SweepAxis::Phi, SweepAxis::Both] {
        let sweep = attacker_sweep(bundle, &key, &truth, axis, &offsets).unwrap();
        let csv = sweep.to_csv();
        pass &= csv.lines().count() == offsets.len() + 1
            && csv.starts_with("theta_deg,phi_deg,offset_deg,acc,rs_bpp\n");
        let at = |o: f64| {
            sweep
                .rows
                .iter()
                .find(|r| r.offset_deg == o)
                .expect("offset row")
        };
        pass &= at(0.0).acc == 1.0;
        pass &= at(0.1).acc < 1.0;
        pass &= at(1.0).rs_bpp < 0.5;
        details.push_str(&format!(
            "{}: acc(0.1)={:.4} bpp(1)={:.3}; ",
            sweep.axis.as_str(),
            at(0.1).acc,
            at(1.0).rs_bpp
        ));
    }
    report(
        "07 key-sensitivity-sweeps",
        pass,
        details.trim_end_matches("; "),
    );
}

#[test]
fn c08_error_correction_and_framing_round_trip() {
    let rs = ReedSolomon::new(255, 223).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut corrected = 0usize;
    for _ in 0..100 {
        let mut data = vec![0u8; 223];
        rng.fill_bytes(&mut data);
        let mut code = rs.encode(&data).unwrap();
        let mut hit = std::collections::HashSet::new();
        while hit.len() < 16 {
            hit.insert(rng.random_range(0..code.len()));
        }
        for &i in &hit {
            code[i] ^= rng.random_range(1..=255u8);
        }
        if rs.decode(&code).unwrap() == data {
            corrected += 1;
        }
    }

    let mut framing_ok = true;
    for d in 1..=6usize {
        let message = full_plane_message(d, 400 + d as u64);
        let planes = BitPlanes::from_message(&message, d, 64, 64).unwrap();
        framing_ok &= planes.to_message().unwrap() == message;
    }

    report(
        "08 codec-correctness",
        corrected == 100 && framing_ok,
        &format!("RS(255,223) fixed 16-byte corruption in {corrected}/100 trials, framing round-trips D=1..6"),
    );
}

#[test]
fn c09_serialization_round_trips_bit_exact() {
    let (bundle, _) = &embed_fixture()[0];
    let key = secret_key();
    let message = full_plane_message(1, 2024);
    let dir = tempfile::tempdir().unwrap();

    let bundle_path = dir.path().join("bundle.nrsg");
    save_bundle(&bundle_path, bundle).unwrap();
    let loaded = load_bundle(&bundle_path).unwrap();
    let resaved_path = dir.path().join("bundle2.nrsg");
    save_bundle(&resaved_path, &loaded).unwrap();
    let bytes_equal =
        std::fs::read(&bundle_path).unwrap() == std::fs::read(&resaved_path).unwrap();

    let key_path = dir.path().join("key.json");
    save_key(&key_path, &key).unwrap();
    let key_back = load_key(&key_path).unwrap();
    let key_equal = key_back == key;

    let recovered = extract_message(&loaded, &key_back).unwrap();
    let exact_after_reload = recovered == message;

    report(
        "09 container-round-trip",
        bytes_equal && key_equal && exact_after_reload,
        &format!(
            "resave byte-identical: {bytes_equal}, key json round-trip: {key_equal}, extraction after reload exact: {exact_after_reload}"
        ),
    );
}

#[test]
fn c10_field_learns_the_scene() {
    let trained = field_fixture();
    let key = secret_key();
    let scene = SceneSpec::three_spheres();
    let truth = render_image(
        &scene,
        &scene,
        &key,
        &RenderOptions {
            n_coarse: GROUND_TRUTH_SAMPLES,
            n_fine: 0,
            background: scene.background,
            jitter: JitterPolicy::Midpoint,
        },
    )
    .unwrap();
    let rendered = render_image(
        &trained.params.coarse_eval(),
        &trained.params.fine_eval(),
        &key,
        &RenderOptions::default(),
    )
    .unwrap();
    let db = psnr(&truth, &rendered).unwrap();

    let trace = &trained.loss_trace;
    let head = trace[..1000].iter().sum::<f64>() / 1000.0;
    let tail = trace[trace.len() - 1000..].iter().sum::<f64>() / 1000.0;

    report(
        "10 field-reconstruction",
        db > 20.0 && tail < head,
        &format!("held-out view PSNR {db:.2} dB after 20k iterations, loss {head:.4} -> {tail:.4}"),
    );
}
