//! Acceptance suite: one test per shipped claim, each ending in a single
//! PASS line with the measured numbers (libtest's per-test verdict is the
//! pass/fail record). The desk-scale reference model and its ablations are
//! trained once and shared across criteria through `OnceLock`s, so the
//! expensive work happens exactly once no matter which subset runs.
//!
//! Criteria at a glance:
//! 1. exact-math oracles for the scattering-model kernels and losses;
//! 2. latent range and multi-scale shape contracts over random draws;
//! 3. analytic gradients vs central finite differences, end to end;
//! 4. cyclic-consistency training reaches held-out HTC and oracle-PSNR
//!    thresholds at the reference configuration;
//! 5. clean-pass content preservation, with the no-CL ablation strictly
//!    worse;
//! 6. one-epoch dehazer adaptation gains PSNR without losing SSIM,
//!    averaged over three seeds;
//! 7. held-out HTC orders monotonically with stage count (table artifact);
//! 8. bit-identical replay, snapshot/resume, and content-hash stability;
//! 9. gamma edits move transfer output strictly toward the airlight and
//!    the vflip edit is a bit-exact involution at the fusion inputs.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array3};
use phatnet::adaptation::{adapt_dehazer, build_finetune_set, AdaptConfig};
use phatnet::asm::{
    compose_asm, flip_vertical, gamma_adjust, transmission_from_recipe, HazeRecipe,
    TransmissionMap,
};
use phatnet::datagen::{generate_domain, DomainSpec, SynthPair};
use phatnet::dehazer::{dehaze, train_dehazer, DehazeTrainConfig, DehazerWeights};
use phatnet::image::ImageTensor;
use phatnet::losses::{cl_loss, htc_loss, total_loss};
use phatnet::metrics::{psnr, ssim};
use phatnet::phatnet::{
    forward, inspect_latents, training_loss_and_grad, transfer, PhatnetWeights, TmEdit,
};
use phatnet::phdt::{
    encode_atmospheric_light, encode_transmission, fuse_asm_latent, AtmosphericLightVector,
    LatentFeatures, PhdtWeights, LATENT_FACTOR,
};
use phatnet::trainer::{train, TrainConfig, Trainer};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Reference configuration (frozen after the reference run)
// ---------------------------------------------------------------------------

/// Training length of the reference model and every ablation trained for
/// comparison against it.
const TRAIN_EPOCHS: usize = 200;
/// Random 128² windows drawn from each pair per epoch.
const CROPS_PER_PAIR: usize = 3;
/// Side length of the synthetic training images; crops jitter inside them.
const IMAGE_SIDE: usize = 160;
/// Side length of evaluation-domain images: equal to the training crop, so
/// every full-frame evaluation matches the receptive-field statistics the
/// model was trained under.
const EVAL_SIDE: usize = 128;
/// Pairs in the training split of the source domain.
const TRAIN_PAIRS: usize = 20;
/// Held-out pairs drawn from the source distribution with a fresh seed.
const HELDOUT_PAIRS: usize = 10;
/// Seed offset separating held-out generation from the training split.
const HELDOUT_SEED_OFFSET: u64 = 1000;
/// Tie tolerance for the stage-count ordering, in held-out HTC units.
const STAGE_TIE_TOL: f64 = 1e-4;
/// Baseline dehazer training length (criterion 6).
const DEHAZER_EPOCHS: usize = 60;
/// Learning rate of the one-epoch adaptation pass (criterion 6).
const ADAPT_LR: f64 = 1e-4;

fn source_spec(pair_count: usize) -> DomainSpec {
    DomainSpec::source_default((IMAGE_SIDE, IMAGE_SIDE), pair_count)
}

fn target_spec(pair_count: usize) -> DomainSpec {
    DomainSpec::target_default((EVAL_SIDE, EVAL_SIDE), pair_count)
}

fn heldout_source(pair_count: usize) -> Vec<SynthPair> {
    let mut spec = DomainSpec::source_default((EVAL_SIDE, EVAL_SIDE), pair_count);
    spec.seed += HELDOUT_SEED_OFFSET;
    generate_domain(&spec).expect("held-out source domain")
}

fn as_dataset(pairs: &[SynthPair]) -> Vec<(ImageTensor, ImageTensor)> {
    pairs
        .iter()
        .map(|p| (p.hazy.clone(), p.clean.clone()))
        .collect()
}

fn reference_config(stage_count: usize, cl_enabled: bool) -> TrainConfig {
    TrainConfig {
        epochs: TRAIN_EPOCHS,
        stage_count,
        channels: 32,
        crop_size: Some(128),
        crops_per_pair: CROPS_PER_PAIR,
        cl_enabled,
        seed: 0,
        ..TrainConfig::default()
    }
}

/// Artifacts every training-dependent criterion shares.
struct Reference {
    model: PhatnetWeights,
    train: Vec<SynthPair>,
    heldout: Vec<SynthPair>,
    train_wall: Duration,
}

fn reference() -> &'static Reference {
    static CELL: OnceLock<Reference> = OnceLock::new();
    CELL.get_or_init(|| {
        let train_pairs = generate_domain(&source_spec(TRAIN_PAIRS)).expect("source domain");
        let dataset = as_dataset(&train_pairs);
        eprintln!("[acceptance] training reference model (S=3, C=32, {TRAIN_EPOCHS} epochs)…");
        let started = Instant::now();
        let model = train(&dataset, reference_config(3, true)).expect("reference training");
        let train_wall = started.elapsed();
        eprintln!("[acceptance] reference model done in {:.1} min", train_wall.as_secs_f64() / 60.0);
        Reference {
            model,
            train: train_pairs,
            heldout: heldout_source(HELDOUT_PAIRS),
            train_wall,
        }
    })
}

/// Reduced-stage models trained with the reference recipe (criterion 7).
fn staged_models() -> &'static [PhatnetWeights; 2] {
    static CELL: OnceLock<[PhatnetWeights; 2]> = OnceLock::new();
    CELL.get_or_init(|| {
        let dataset = as_dataset(&reference().train);
        let mut models = Vec::new();
        for stage_count in [1, 2] {
            eprintln!("[acceptance] training {stage_count}-stage ablation…");
            let started = Instant::now();
            let model =
                train(&dataset, reference_config(stage_count, true)).expect("stage ablation");
            eprintln!(
                "[acceptance] {stage_count}-stage ablation done in {:.1} min",
                started.elapsed().as_secs_f64() / 60.0
            );
            models.push(model);
        }
        [models.remove(0), models.remove(0)]
    })
}

/// Reference recipe without the content-leakage branch (criterion 5).
fn no_cl_model() -> &'static PhatnetWeights {
    static CELL: OnceLock<PhatnetWeights> = OnceLock::new();
    CELL.get_or_init(|| {
        let dataset = as_dataset(&reference().train);
        eprintln!("[acceptance] training no-CL ablation…");
        let started = Instant::now();
        let model = train(&dataset, reference_config(3, false)).expect("no-CL ablation");
        eprintln!(
            "[acceptance] no-CL ablation done in {:.1} min",
            started.elapsed().as_secs_f64() / 60.0
        );
        model
    })
}

/// Mean held-out haze-transfer consistency: the HTC loss averaged over its
/// scales (so stage counts stay comparable) and over pairs.
fn heldout_htc(model: &PhatnetWeights, pairs: &[SynthPair]) -> f64 {
    let mut acc = 0.0;
    for p in pairs {
        let out = forward(&p.hazy, &p.clean, model, &TmEdit::None).expect("held-out forward");
        let loss = htc_loss(&out, &p.hazy).expect("held-out HTC");
        acc += loss.total() / loss.per_scale().len() as f64;
    }
    acc / pairs.len() as f64
}

/// Mean PSNR of clean→clean transfer against the content image.
fn clean_pass_psnr(model: &PhatnetWeights, pairs: &[SynthPair]) -> f64 {
    let n = pairs.len();
    let mut acc = 0.0;
    for i in 0..n {
        let content = &pairs[(i + 1) % n].clean;
        let out = transfer(&pairs[i].clean, content, model, &TmEdit::None).expect("clean pass");
        acc += psnr(&out, content).expect("clean-pass PSNR");
    }
    acc / n as f64
}

fn artifact_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("artifact dir");
    dir
}

// ---------------------------------------------------------------------------
// 1. Exact-math suite
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_exact_math_oracles() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(410);
    let rel = |got: f64, want: f64| (got - want).abs() / want.abs().max(1e-300);

    // compose_asm against a per-pixel loop.
    for _ in 0..20 {
        let clean = ImageTensor::new(Array3::from_shape_fn((8, 8, 3), |_| {
            rng.random_range(0.0..1.0)
        }))
        .unwrap();
        let tvals = Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..1.0));
        let t = TransmissionMap::new(tvals.clone()).unwrap();
        let a = [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ];
        let out = compose_asm(&clean, &t, a).unwrap();
        for ((y, x, c), &got) in out.data().indexed_iter() {
            let want =
                (clean.data()[[y, x, c]] * tvals[[y, x]] + a[c] * (1.0 - tvals[[y, x]]))
                    .clamp(0.0, 1.0);
            assert!(rel(got, want) <= 1e-9, "compose ({y},{x},{c}): {got} vs {want}");
        }
    }

    // transmission_from_recipe against exp(−β·f·d) loops, with and
    // without a field.
    for with_field in [false, true] {
        let depth = Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..4.0));
        let field = Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..1.0));
        let beta = rng.random_range(0.2..3.0);
        let recipe = HazeRecipe::new(
            depth.clone(),
            beta,
            [0.9; 3],
            with_field.then(|| field.clone()),
        )
        .unwrap();
        let t = transmission_from_recipe(&recipe);
        for (idx, &got) in t.data().indexed_iter() {
            let f = if with_field { field[idx] } else { 1.0 };
            let want = (-beta * f * depth[idx]).exp();
            assert!(rel(got, want) <= 1e-9, "transmission {idx:?}: {got} vs {want}");
        }
    }

    // fuse_asm_latent against the blend loop.
    for _ in 0..10 {
        let fj =
            LatentFeatures::new(Array3::from_shape_fn((8, 8, 3), |_| rng.random_range(-1.0..2.0)))
                .unwrap();
        let ftm =
            LatentFeatures::new(Array3::from_shape_fn((8, 8, 3), |_| rng.random_range(0.01..1.0)))
                .unwrap();
        let fal = AtmosphericLightVector::new(Array1::from_shape_fn(3, |_| {
            rng.random_range(0.01..1.0)
        }))
        .unwrap();
        let fused = fuse_asm_latent(&fj, &ftm, &fal).unwrap();
        for ((y, x, c), &got) in fused.data().indexed_iter() {
            let t = ftm.data()[[y, x, c]];
            let want = fj.data()[[y, x, c]] * t + fal.data()[c] * (1.0 - t);
            assert!(rel(got, want) <= 1e-9, "fuse ({y},{x},{c}): {got} vs {want}");
        }
    }

    // gamma_adjust and flip_vertical against loops.
    for _ in 0..10 {
        let tvals = Array2::from_shape_fn((8, 8), |_| rng.random_range(0.001..1.0));
        let t = TransmissionMap::new(tvals.clone()).unwrap();
        let g = rng.random_range(0.2..3.0);
        let adjusted = gamma_adjust(&t, g).unwrap();
        for (idx, &got) in adjusted.data().indexed_iter() {
            assert!(rel(got, tvals[idx].powf(g)) <= 1e-9);
        }
        let flipped = flip_vertical(&t);
        for ((y, x), &got) in flipped.data().indexed_iter() {
            assert_eq!(got, tvals[[7 - y, x]]);
        }
    }

    // Losses on real network output at 8×8 against a scalar loop.
    for seed in 0..5u64 {
        let w = PhatnetWeights::init(1, 4, seed).unwrap();
        let hazy = ImageTensor::new(Array3::from_shape_fn((8, 8, 3), |_| {
            rng.random_range(0.0..1.0)
        }))
        .unwrap();
        let clean = ImageTensor::new(Array3::from_shape_fn((8, 8, 3), |_| {
            rng.random_range(0.0..1.0)
        }))
        .unwrap();
        let out = forward(&hazy, &clean, &w, &TmEdit::None).unwrap();
        let htc = htc_loss(&out, &hazy).unwrap();
        let cl = cl_loss(&out, &clean).unwrap();
        for (loss, reference) in [(&htc, &hazy), (&cl, &clean)] {
            let mut acc = 0.0;
            for (o, r) in out.finest().iter().zip(reference.data().iter()) {
                acc += (o - r).abs();
            }
            let want = acc / (8.0 * 8.0 * 3.0);
            assert!(rel(loss.total(), want) <= 1e-9, "{} vs {want}", loss.total());
        }
        assert!(rel(total_loss(&htc, &cl), htc.total() + cl.total()) <= 1e-9);
    }

    // Fixed-point examples.
    let gray = ImageTensor::constant(8, 8, [0.3; 3]).unwrap();
    let unit = TransmissionMap::constant(8, 8, 1.0).unwrap();
    assert_eq!(compose_asm(&gray, &unit, [0.9; 3]).unwrap().data(), gray.data());
    let zero = TransmissionMap::constant(8, 8, 0.0).unwrap();
    assert!(compose_asm(&gray, &zero, [0.7, 0.8, 0.9])
        .unwrap()
        .data()
        .indexed_iter()
        .all(|((_, _, c), &v)| v == [0.7, 0.8, 0.9][c]));
    let half = TransmissionMap::constant(8, 8, 0.5).unwrap();
    let sq = gamma_adjust(&half, 2.0).unwrap();
    assert!((sq.data()[[0, 0]] - 0.25).abs() < 1e-15);
    let quarter = TransmissionMap::constant(8, 8, 0.25).unwrap();
    assert!((gamma_adjust(&quarter, 0.5).unwrap().data()[[0, 0]] - 0.5).abs() < 1e-15);
    let zero_depth = HazeRecipe::new(Array2::zeros((8, 8)), 1.0, [0.9; 3], None).unwrap();
    assert!(transmission_from_recipe(&zero_depth).data().iter().all(|&v| v == 1.0));

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(10), "exact-math suite took {elapsed:?}");
    println!(
        "criterion 1 PASS: exact-math oracles matched to ≤1e-9 rel in {:.2} s (< 10 s)",
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// 2. Range/shape suite
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_latent_ranges_and_shape_contracts() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(420);
    let mut range_violations = 0usize;
    for draw in 0..100 {
        let stage_count = rng.random_range(1..=3);
        let channels = rng.random_range(2..=8);
        let w = PhatnetWeights::init(stage_count, channels, draw as u64).unwrap();
        let div = w.required_divisor();
        let (h, wd) = (
            div * rng.random_range(1..=2) * 2,
            div * rng.random_range(1..=2) * 2,
        );
        let hazy = phatnet::datagen::generate_clean_scene(1000 + draw as u64, h, wd).unwrap();
        let clean = phatnet::datagen::generate_clean_scene(2000 + draw as u64, h, wd).unwrap();

        let latents = inspect_latents(&hazy, &w, &TmEdit::None).unwrap();
        assert_eq!(latents.len(), stage_count);
        for (s, st) in latents.iter().enumerate() {
            let (sh, sw) = (h >> s, wd >> s);
            assert_eq!(
                st.ftm.data().dim(),
                (sh / LATENT_FACTOR, sw / LATENT_FACTOR, channels),
                "draw {draw}: stage {s} latent shape"
            );
            assert_eq!(st.fal.len(), channels);
            let escapes = |v: &&f64| !(**v > 0.0 && **v <= 1.0);
            range_violations += st.fal.data().iter().filter(escapes).count();
            range_violations += st.ftm.data().iter().filter(escapes).count();
        }

        let out = forward(&hazy, &clean, &w, &TmEdit::None).unwrap();
        assert_eq!(out.scale_count(), stage_count);
        for (s, o) in out.outputs().iter().enumerate() {
            assert_eq!(o.dim(), (h >> s, wd >> s, 3), "draw {draw}: stage {s} output shape");
        }
    }
    assert_eq!(range_violations, 0, "latent values escaped (0, 1]");

    // The stage count itself is a contract: only 1–3 stages exist.
    assert!(PhatnetWeights::init(0, 8, 0).is_err());
    assert!(PhatnetWeights::init(4, 8, 0).is_err());

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(60), "range/shape suite took {elapsed:?}");
    println!(
        "criterion 2 PASS: 100 draws, 0 range violations, shape contracts hold in {:.1} s (< 60 s)",
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// 3. Gradient suite
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_gradients_match_finite_differences() {
    let started = Instant::now();
    let eps = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(430);

    // fuse_asm_latent partials: perturb each input through the public
    // function and compare the analytic formulas ∂out/∂fj = t,
    // ∂out/∂t = fj − a, ∂out/∂a = 1 − t against central differences.
    let fj_arr = Array3::from_shape_fn((8, 8, 3), |_| rng.random_range(-1.0..2.0));
    let ftm_arr = Array3::from_shape_fn((8, 8, 3), |_| rng.random_range(0.05..0.95));
    let fal_arr = Array1::from_shape_fn(3, |_| rng.random_range(0.05..0.95));
    let fuse =
        |fj: &Array3<f64>, ftm: &Array3<f64>, fal: &Array1<f64>| -> Array3<f64> {
            fuse_asm_latent(
                &LatentFeatures::new(fj.clone()).unwrap(),
                &LatentFeatures::new(ftm.clone()).unwrap(),
                &AtmosphericLightVector::new(fal.clone()).unwrap(),
            )
            .unwrap()
            .data()
            .clone()
        };
    let mut fuse_checks = 0;
    for _ in 0..24 {
        let idx = [
            rng.random_range(0..8),
            rng.random_range(0..8),
            rng.random_range(0..3),
        ];
        let at = |arr: &Array3<f64>| arr[[idx[0], idx[1], idx[2]]];

        let mut up = fj_arr.clone();
        up[[idx[0], idx[1], idx[2]]] += eps;
        let mut dn = fj_arr.clone();
        dn[[idx[0], idx[1], idx[2]]] -= eps;
        let fd = (at(&fuse(&up, &ftm_arr, &fal_arr)) - at(&fuse(&dn, &ftm_arr, &fal_arr)))
            / (2.0 * eps);
        assert!((fd - at(&ftm_arr)).abs() <= 1e-6, "∂/∂fj: {fd} vs {}", at(&ftm_arr));

        let mut up = ftm_arr.clone();
        up[[idx[0], idx[1], idx[2]]] += eps;
        let mut dn = ftm_arr.clone();
        dn[[idx[0], idx[1], idx[2]]] -= eps;
        let fd = (at(&fuse(&fj_arr, &up, &fal_arr)) - at(&fuse(&fj_arr, &dn, &fal_arr)))
            / (2.0 * eps);
        let want = at(&fj_arr) - fal_arr[idx[2]];
        assert!((fd - want).abs() <= 1e-6, "∂/∂t: {fd} vs {want}");

        let mut up = fal_arr.clone();
        up[idx[2]] += eps;
        let mut dn = fal_arr.clone();
        dn[idx[2]] -= eps;
        let fd = (at(&fuse(&fj_arr, &ftm_arr, &up)) - at(&fuse(&fj_arr, &ftm_arr, &dn)))
            / (2.0 * eps);
        let want = 1.0 - at(&ftm_arr);
        assert!((fd - want).abs() <= 1e-6, "∂/∂a: {fd} vs {want}");
        fuse_checks += 3;
    }
    assert!(fuse_checks >= 72);

    // End-to-end training loss at 32×32, C=8, S=2: analytic parameter
    // gradients vs central differences on sampled coordinates. The mean-L1
    // objective is piecewise smooth: a residual crossing zero inside the
    // ±ε window biases the central quotient by up to the full slope of the
    // crossing term, and the bias can be step-size stable (a residual at
    // the kink reads ~0 from any central step). The one-sided spread
    // |fd⁺ − fd⁻| exposes exactly those terms (≈ 2·slope at a kink,
    // O(ε·f″) when smooth), so coordinates are only counted when the
    // spread is small against the gradient; contaminated draws are
    // skipped, not silently tolerated.
    let w0 = PhatnetWeights::init(2, 8, 431).unwrap();
    let hazy = phatnet::datagen::generate_clean_scene(3001, 32, 32).unwrap();
    let clean = phatnet::datagen::generate_clean_scene(3002, 32, 32).unwrap();
    let unpaired = phatnet::datagen::generate_clean_scene(3003, 32, 32).unwrap();
    let (_, analytic) = training_loss_and_grad(&hazy, &clean, Some(&unpaired), &w0).unwrap();
    let params = w0.export_params();

    let loss_at = |theta: &[f64]| -> f64 {
        let mut w = w0.clone();
        w.import_params(theta).unwrap();
        training_loss_and_grad(&hazy, &clean, Some(&unpaired), &w).unwrap().0
    };
    let loss0 = loss_at(&params);

    let mut checked = 0;
    let mut skipped_kinks = 0;
    let mut worst_rel: f64 = 0.0;
    let mut k_draws: Vec<usize> = (0..params.len()).collect();
    k_draws.shuffle(&mut rng);
    for &k in k_draws.iter().take(400) {
        if checked == 40 {
            break;
        }
        if analytic[k].abs() < 1e-7 {
            continue; // dead coordinate: nothing to compare against
        }
        let mut up = params.clone();
        up[k] += eps;
        let mut dn = params.clone();
        dn[k] -= eps;
        let (l_up, l_dn) = (loss_at(&up), loss_at(&dn));
        let fd = (l_up - l_dn) / (2.0 * eps);
        let spread = (l_up + l_dn - 2.0 * loss0).abs() / eps;
        if spread > 0.02 * analytic[k].abs() {
            skipped_kinks += 1;
            continue;
        }
        let rel = (fd - analytic[k]).abs() / analytic[k].abs();
        worst_rel = worst_rel.max(rel);
        assert!(
            rel <= 1e-2,
            "coordinate {k}: fd {fd} vs analytic {}, rel {rel}",
            analytic[k]
        );
        checked += 1;
    }
    assert!(
        checked >= 25,
        "only {checked} kink-free coordinates checked ({skipped_kinks} contaminated)"
    );

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(300), "gradient suite took {elapsed:?}");
    println!(
        "criterion 3 PASS: fuse partials ≤1e-6 ({fuse_checks} probes); end-to-end \
         rel ≤ 1e-2 on {checked} coords (worst {worst_rel:.2e}, {skipped_kinks} kink-skipped) \
         in {:.0} s (< 300 s)",
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// 4. Cyclic-consistency training
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_training_reaches_heldout_thresholds() {
    let r = reference();
    assert!(
        r.train_wall < Duration::from_secs(8 * 3600),
        "reference training took {:?} (cap: 8 h)",
        r.train_wall
    );

    let htc = heldout_htc(&r.model, &r.heldout);
    assert!(htc <= 0.05, "held-out HTC {htc:.4} exceeds 0.05");

    // Transfer vs the scattering-model oracle: the held-out pair's exact
    // recipe applied to a different clean scene.
    let n = r.heldout.len();
    let mut acc = 0.0;
    for i in 0..n {
        let donor = &r.heldout[i];
        let content = &r.heldout[(i + 1) % n].clean;
        let predicted =
            transfer(&donor.hazy, content, &r.model, &TmEdit::None).expect("transfer");
        let t = transmission_from_recipe(&donor.recipe);
        let oracle =
            compose_asm(content, &t, donor.recipe.atmospheric_light).expect("oracle compose");
        acc += psnr(&predicted, &oracle).expect("oracle PSNR");
    }
    let oracle_psnr = acc / n as f64;
    assert!(oracle_psnr >= 25.0, "transfer-vs-oracle PSNR {oracle_psnr:.2} dB below 25 dB");

    println!(
        "criterion 4 PASS: held-out HTC {htc:.4} ≤ 0.05, transfer-vs-oracle PSNR \
         {oracle_psnr:.2} dB ≥ 25 dB (trained {TRAIN_EPOCHS} epochs in {:.1} min)",
        r.train_wall.as_secs_f64() / 60.0
    );
}

// ---------------------------------------------------------------------------
// 5. Content-leakage property
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_clean_pass_preserves_content() {
    let r = reference();
    let with_cl = clean_pass_psnr(&r.model, &r.heldout);
    assert!(with_cl >= 30.0, "clean-pass PSNR {with_cl:.2} dB below 30 dB");

    let without_cl = clean_pass_psnr(no_cl_model(), &r.heldout);
    assert!(
        without_cl < with_cl,
        "ablation without the CL branch ({without_cl:.2} dB) should score strictly \
         below the full model ({with_cl:.2} dB)"
    );
    println!(
        "criterion 5 PASS: clean-pass PSNR {with_cl:.2} dB ≥ 30 dB; no-CL ablation \
         {without_cl:.2} dB is strictly lower"
    );
}

// ---------------------------------------------------------------------------
// 6. Adaptation gain
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_one_epoch_adaptation_gains_psnr() {
    let r = reference();

    // Target domain differs in β range, airlight color, and haze-field
    // structure by construction (homogeneous warm vs field-modulated blue).
    let target = generate_domain(&target_spec(20)).expect("target domain");
    let (finetune_split, test_split) = target.split_at(10);

    eprintln!("[acceptance] training baseline dehazer ({DEHAZER_EPOCHS} epochs)…");
    let dz_cfg = DehazeTrainConfig {
        epochs: DEHAZER_EPOCHS,
        crop_size: Some(128),
        ..DehazeTrainConfig::default()
    };
    let (baseline, _) = train_dehazer(&as_dataset(&r.train), &dz_cfg).expect("baseline dehazer");

    let score = |weights: &DehazerWeights| -> (f64, f64) {
        let mut p_acc = 0.0;
        let mut s_acc = 0.0;
        for pair in test_split {
            let restored = dehaze(&pair.hazy, weights).expect("dehaze");
            p_acc += psnr(&restored, &pair.clean).expect("psnr");
            s_acc += ssim(&restored, &pair.clean).expect("ssim");
        }
        (p_acc / test_split.len() as f64, s_acc / test_split.len() as f64)
    };
    let (base_psnr, base_ssim) = score(&baseline);

    // M=10 target hazy × N=20 source clean (center-cropped to the
    // evaluation side so transfer runs at the trained window size),
    // plain transfer only.
    eprintln!("[acceptance] building fine-tuning set (10×20)…");
    let margin = (IMAGE_SIDE - EVAL_SIDE) / 2;
    let source_clean: Vec<ImageTensor> = r
        .train
        .iter()
        .map(|p| {
            let window = p.clean.data().slice(ndarray::s![
                margin..margin + EVAL_SIDE,
                margin..margin + EVAL_SIDE,
                ..
            ]);
            ImageTensor::new(window.to_owned()).expect("center crop")
        })
        .collect();
    let set = build_finetune_set(
        finetune_split.iter().map(|p| p.hazy.clone()).collect(),
        source_clean,
        r.model.clone(),
        &[TmEdit::None],
    )
    .expect("finetune set");
    assert_eq!(set.len(), 200);
    assert!(set.failures().is_empty());
    let pairs = set.materialize_all().expect("materialize");

    let mut dp_acc = 0.0;
    let mut ds_acc = 0.0;
    for seed in 0..3u64 {
        let cfg = AdaptConfig {
            epochs: 1,
            lr: ADAPT_LR,
            seed,
            ..AdaptConfig::default()
        };
        let (adapted, _) = adapt_dehazer(&baseline, &pairs, &cfg).expect("adaptation");
        let (p, s) = score(&adapted);
        eprintln!(
            "[acceptance] seed {seed}: {base_psnr:.3} → {p:.3} dB, SSIM {base_ssim:.4} → {s:.4}"
        );
        dp_acc += p - base_psnr;
        ds_acc += s - base_ssim;
    }
    let mean_dpsnr = dp_acc / 3.0;
    let mean_dssim = ds_acc / 3.0;
    assert!(
        mean_dpsnr >= 0.3,
        "mean PSNR gain {mean_dpsnr:.3} dB below 0.3 dB (baseline {base_psnr:.2} dB)"
    );
    assert!(mean_dssim >= 0.0, "mean SSIM change {mean_dssim:.5} is a regression");
    println!(
        "criterion 6 PASS: one-epoch adaptation gains {mean_dpsnr:.3} dB PSNR \
         (≥ 0.3) and {mean_dssim:+.5} SSIM (≥ 0) over 3 seeds"
    );
}

// ---------------------------------------------------------------------------
// 7. Stage-count ablation
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_stage_count_orders_heldout_htc() {
    let r = reference();
    let [s1, s2] = staged_models();
    let rows = [
        (1usize, heldout_htc(s1, &r.heldout)),
        (2, heldout_htc(s2, &r.heldout)),
        (3, heldout_htc(&r.model, &r.heldout)),
    ];

    let tie_12 = (rows[0].1 - rows[1].1).abs() <= STAGE_TIE_TOL;
    let tie_23 = (rows[1].1 - rows[2].1).abs() <= STAGE_TIE_TOL;
    let mut table = String::from("stages,heldout_htc,tied_with_next\n");
    for (i, (s, htc)) in rows.iter().enumerate() {
        let tie = match i {
            0 => tie_12,
            1 => tie_23,
            _ => false,
        };
        table.push_str(&format!("{s},{htc},{tie}\n"));
    }
    let path = artifact_dir().join("stage_ablation.csv");
    std::fs::write(&path, &table).expect("write ablation table");

    // Quality must not degrade as stages are added (lower HTC is better).
    assert!(
        rows[2].1 <= rows[1].1 + STAGE_TIE_TOL,
        "3-stage HTC {:.5} worse than 2-stage {:.5}",
        rows[2].1,
        rows[1].1
    );
    assert!(
        rows[1].1 <= rows[0].1 + STAGE_TIE_TOL,
        "2-stage HTC {:.5} worse than 1-stage {:.5}",
        rows[1].1,
        rows[0].1
    );
    println!(
        "criterion 7 PASS: held-out HTC 1/2/3 stages = {:.5}/{:.5}/{:.5} \
         (ties: 1–2 {tie_12}, 2–3 {tie_23}); table at {}",
        rows[0].1,
        rows[1].1,
        rows[2].1,
        path.display()
    );
}

// ---------------------------------------------------------------------------
// 8. Determinism and persistence
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_determinism_and_persistence() {
    let pairs = generate_domain(&DomainSpec::source_default((64, 64), 4)).unwrap();
    let dataset = as_dataset(&pairs);
    let cfg = TrainConfig {
        epochs: 3,
        stage_count: 2,
        channels: 8,
        crop_size: Some(32),
        ..TrainConfig::default()
    };

    // Fixed-seed replay is bit-identical, including the loss history.
    let mut a = Trainer::new(&dataset, cfg.clone()).unwrap();
    a.run().unwrap();
    let mut b = Trainer::new(&dataset, cfg.clone()).unwrap();
    b.run().unwrap();
    assert_eq!(a.history(), b.history(), "replay history diverged");
    assert_eq!(
        a.weights().export_params(),
        b.weights().export_params(),
        "replay weights diverged"
    );

    // Interrupting at a snapshot and resuming matches the uninterrupted run.
    let dir = tempfile::tempdir().unwrap();
    let snap = dir.path().join("mid.ckpt");
    let mut half = Trainer::new(&dataset, cfg.clone()).unwrap();
    half.run_steps(5).unwrap();
    half.save_snapshot(&snap).unwrap();
    let mut resumed = Trainer::load_snapshot(&snap, &dataset).unwrap();
    let remaining = resumed.total_steps() - resumed.step_index();
    resumed.run_steps(remaining).unwrap();
    assert_eq!(resumed.history(), a.history(), "resumed history diverged");
    assert_eq!(
        resumed.weights().export_params(),
        a.weights().export_params(),
        "resumed weights diverged"
    );

    // Fine-tuning sets hash identically across regenerations.
    let model = PhatnetWeights::init(2, 8, 88).unwrap();
    let hazy: Vec<_> = pairs.iter().take(2).map(|p| p.hazy.clone()).collect();
    let clean: Vec<_> = pairs.iter().take(3).map(|p| p.clean.clone()).collect();
    let manifest_of = |dir: &std::path::Path| {
        let set = build_finetune_set(hazy.clone(), clean.clone(), model.clone(), &[TmEdit::None, TmEdit::Vflip])
            .unwrap();
        set.write_dir(dir, None).unwrap()
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let m1 = manifest_of(d1.path());
    let m2 = manifest_of(d2.path());
    assert_eq!(m1.target_hazy_sha256, m2.target_hazy_sha256);
    let hashes = |m: &phatnet::adaptation::FinetuneDirManifest| -> Vec<(String, String)> {
        m.entries
            .iter()
            .map(|e| (e.sha256.clone(), e.clean_sha256.clone()))
            .collect()
    };
    assert_eq!(hashes(&m1), hashes(&m2), "fine-tuning set hashes unstable");

    println!(
        "criterion 8 PASS: replay, snapshot/resume, and fine-tuning-set hashes \
         are bit-identical"
    );
}

// ---------------------------------------------------------------------------
// 9. Parametric augmentation monotonicity
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_gamma_moves_toward_airlight_and_vflip_is_involutive() {
    let r = reference();
    let n = r.heldout.len();
    assert_eq!(n, 10);

    // Mean output intensity per gamma, and the mean airlight it should
    // approach as gamma raises haze density.
    let mut mean_out = [0.0; 3];
    let mut airlight_mean = 0.0;
    for i in 0..n {
        let donor = &r.heldout[i];
        let content = &r.heldout[(i + 1) % n].clean;
        airlight_mean += donor.recipe.atmospheric_light.iter().sum::<f64>() / 3.0;
        for (gi, gamma) in [0.7, 1.0, 1.5].into_iter().enumerate() {
            let out =
                transfer(&donor.hazy, content, &r.model, &TmEdit::Gamma(gamma)).expect("transfer");
            mean_out[gi] += out.mean();
        }
    }
    for m in &mut mean_out {
        *m /= n as f64;
    }
    airlight_mean /= n as f64;
    let dist: Vec<f64> = mean_out.iter().map(|m| (m - airlight_mean).abs()).collect();
    assert!(
        dist[0] > dist[1] && dist[1] > dist[2],
        "means {mean_out:?} do not move strictly toward airlight {airlight_mean:.4} \
         as gamma rises (distances {dist:?})"
    );

    // Applying the vertical flip twice at the fusion inputs is exactly the
    // unedited latent; the airlight vector never changes.
    for pair in r.heldout.iter().take(3) {
        let plain = inspect_latents(&pair.hazy, &r.model, &TmEdit::None).unwrap();
        let flipped = inspect_latents(&pair.hazy, &r.model, &TmEdit::Vflip).unwrap();
        for (p, f) in plain.iter().zip(&flipped) {
            let mut twice = f.ftm.data().clone();
            twice.invert_axis(ndarray::Axis(0));
            assert_eq!(&twice, p.ftm.data(), "vflip twice failed to cancel");
            assert_eq!(f.fal.data(), p.fal.data(), "edit leaked into the airlight path");
        }
    }

    println!(
        "criterion 9 PASS: output means {:.4}/{:.4}/{:.4} move strictly toward \
         airlight {airlight_mean:.4} through gamma 0.7/1.0/1.5; vflip cancels \
         bit-exactly at the fusion inputs",
        mean_out[0], mean_out[1], mean_out[2]
    );
}

// ---------------------------------------------------------------------------
// Shared helpers exercised above
// ---------------------------------------------------------------------------

/// The standalone block and the public encoders agree; used by several
/// criteria as a smoke precondition and kept here so a contract break
/// fails loudly before the heavy training starts.
#[test]
fn criterion_0_public_encoders_are_consistent() {
    let w = PhdtWeights::init(4, 7).unwrap();
    let hazy = phatnet::datagen::generate_clean_scene(77, 16, 16).unwrap();
    let fal = encode_atmospheric_light(&hazy, &w).unwrap();
    let ftm = encode_transmission(&hazy, &w).unwrap();
    assert_eq!(fal.len(), 4);
    assert_eq!(ftm.data().dim(), (2, 2, 4));
    assert!(fal.data().iter().all(|&v| v > 0.0 && v <= 1.0));
    assert!(ftm.data().iter().all(|&v| v > 0.0 && v <= 1.0));
}
